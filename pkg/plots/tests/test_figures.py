import numpy as np
import pytest

from moderr_plots import figures
from moderr_plots.cli import main


def write_csv(path, columns):
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(columns)
    arrays = [np.asarray(columns[k]) for k in names]
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(names) + "\n")
        for i in range(arrays[0].shape[0]):
            fh.write(",".join(str(a[i]) for a in arrays) + "\n")


@pytest.fixture(scope="module")
def results(tmp_path_factory):
    root = tmp_path_factory.mktemp("results")
    rng = np.random.default_rng(0)
    t = np.linspace(0.0, 0.5, 21)
    for name in ("oracle.csv", "closure.csv"):
        write_csv(root / "ex1_moments" / name, {
            "t": t, "mean": 0.5 * np.exp(-t), "var": 0.01 * np.exp(-2 * t),
            "skew": np.zeros_like(t), "escaped_frac": np.zeros_like(t)})

    m = np.arange(1, 101)
    for k in (10, 20):
        write_csv(root / "ex2_adaptive_etkf" / f"adaptive_k{k}.csv", {
            "m": m, "q1": 0.1 / k * np.ones(100), "q2": 0.01 * np.ones(100),
            "r": 1.0 + rng.standard_normal(100) / k,
            "rmse_state": 1.0 + 0.1 * rng.standard_normal(100),
            "clip_count": np.zeros(100)})

    write_csv(root / "ex3_stoch_param" / "rmse_vs_dtobs.csv", {
        "dt_obs": [0.05, 0.1, 0.2], "rmse_online": [0.2, 0.3, 0.5],
        "rmse_offline": [0.4, 0.5, 0.7], "alpha_online": [0.3, 0.3, 0.3],
        "sigma_online": [0.4, 0.3, 0.2], "r_online": [0.1, 0.1, 0.2]})
    grid = np.linspace(-10, 20, 50)
    lag = np.linspace(0, 4, 80)
    for variant in ("full", "online", "offline"):
        write_csv(root / "ex3_stoch_param" / f"pdf_{variant}.csv",
                  {"x": grid, "pdf": np.exp(-((grid - 2) / 6) ** 2) / 10})
        write_csv(root / "ex3_stoch_param" / f"acf_{variant}.csv",
                  {"lag": lag, "acf": np.exp(-lag) * np.cos(3 * lag)})

    eps = [0.01, 0.1, 0.5, 1.0]
    rows = []
    for variant in ("true", "rsf", "rsfa", "opt"):
        for e in eps:
            rows.append((variant, e, 0.3 + 0.05 * e, 0.25 + 0.02 * e, 1.0))
    write_csv(root / "ex4_twoscale" / "twoscale.csv", {
        "variant": np.array([r[0] for r in rows]),
        "eps": np.array([r[1] for r in rows]),
        "mse": np.array([r[2] for r in rows]),
        "p_post": np.array([r[3] for r in rows]),
        "var_x": np.array([r[4] for r in rows])})

    n = 120
    trace = {"m": np.arange(1, n + 1),
             "re_truth": rng.standard_normal(n),
             "im_truth": rng.standard_normal(n)}
    for v in ("spekf", "rspekf", "rsfa", "rsf"):
        trace[f"re_mean_{v}"] = rng.standard_normal(n)
        trace[f"im_mean_{v}"] = rng.standard_normal(n)
        trace[f"pvar_{v}"] = 0.2 + 0.05 * rng.random(n)
    write_csv(root / "ex5_spekf" / "trace.csv", trace)
    write_csv(root / "ex5_spekf" / "summary.csv", {
        "rmse_spekf": [0.44], "rmse_rspekf": [0.45], "rmse_rsfa": [0.48],
        "rmse_rsf": [0.65], "sqrt_r": [0.63], "var_u": [0.79]})

    pts = rng.standard_normal((300, 2))
    for tag in ("t0", "t0p5", "t2"):
        write_csv(root / "ex6_diffusion" / f"snapshot_{tag}.csv", {
            "xpy": pts[:, 0], "z": pts[:, 1], "p": rng.random(300)})
        write_csv(root / "ex6_diffusion" / f"ensemble_{tag}.csv", {
            "xpy": pts[:, 0] + 0.1, "z": pts[:, 1] - 0.1})

    lead = np.linspace(0, 10, 41)
    write_csv(root / "ex7_semiparam" / "forecast_rmse.csv", {
        "lead": lead, "rmse_perfect": 5 * (1 - np.exp(-lead)),
        "rmse_semiparam": 5.2 * (1 - np.exp(-0.9 * lead)),
        "rmse_l96": 5.1 * (1 - np.exp(-0.95 * lead)),
        "clim_err": np.full_like(lead, 5.3)})
    return root


@pytest.mark.parametrize("figure_id", sorted(figures.RENDERERS))
def test_every_figure_renders(results, figure_id, tmp_path):
    out = figures.render(results, figure_id, out_dir=tmp_path)
    assert out.exists() and out.stat().st_size > 1000


@pytest.mark.parametrize("fmt", ["png", "svg"])
def test_rerender_is_byte_stable(results, tmp_path, fmt):
    a = figures.render(results, "ex4_twoscale", out_dir=tmp_path / "a", fmt=fmt)
    b = figures.render(results, "ex4_twoscale", out_dir=tmp_path / "b", fmt=fmt)
    assert a.read_bytes() == b.read_bytes()


def test_missing_csv_names_the_file(results, tmp_path):
    with pytest.raises(figures.MissingInputError) as info:
        figures.render(tmp_path, "ex4_twoscale")
    assert any("twoscale.csv" in p for p in info.value.paths)


def test_unknown_figure_id(results):
    with pytest.raises(KeyError):
        figures.render(results, "ex99")


def test_cli_render_all(results, tmp_path, capsys):
    code = main(["render", "--results", str(results), "--figure", "all",
                 "--out", str(tmp_path)])
    assert code == 0
    made = sorted(p.name for p in tmp_path.iterdir())
    assert len(made) == len(figures.RENDERERS)


def test_cli_single_figure_svg(results, tmp_path):
    code = main(["render", "--results", str(results), "--figure",
                 "ex7_semiparam", "--format", "svg", "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "ex7_semiparam.svg").exists()


def test_cli_missing_inputs_fail_with_named_file(tmp_path, capsys):
    code = main(["render", "--results", str(tmp_path), "--figure",
                 "ex1_moments"])
    assert code == 1
    assert "oracle.csv" in capsys.readouterr().err


def test_cli_list(capsys):
    assert main(["list"]) == 0
    assert "ex6_diffusion" in capsys.readouterr().out
