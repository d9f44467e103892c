import os

# Reference path: single-threaded BLAS.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from dotenv import load_dotenv  # noqa: E402

load_dotenv()

from graphformers.cli import main  # noqa: E402

if __name__ == "__main__":
    main()
