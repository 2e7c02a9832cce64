import os

# The suite is budgeted for a small desktop core count; cap BLAS pools
# before numpy is first imported.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "4")
