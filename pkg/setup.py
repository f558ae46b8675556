import numpy
from setuptools import setup

# The compiled kernels are an accelerator, not a requirement: if Cython is
# missing the package installs pure-Python and protopipe.kernels falls back
# to the numpy implementation at import time.
try:
    from Cython.Build import cythonize
    from setuptools import Extension
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "protopipe.kernels._fastops",
                sources=["src/protopipe/kernels/_fastops.pyx"],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )

setup(
    ext_modules=ext_modules,
    include_dirs=[numpy.get_include()],
)
