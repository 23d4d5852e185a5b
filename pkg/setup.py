"""Build script: compiles the optional fast kernel core.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so the build is marked optional and a missing
compiler or Cython install degrades gracefully to the pure-Python wheel.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "driverintent.kernel._kernels_c",
                ["src/driverintent/kernel/_kernels_c.pyx"],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
