from moderr.util import limit_blas_threads

limit_blas_threads(1)
