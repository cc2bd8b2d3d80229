"""Build the optional compiled kernel; the package works without it."""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("HDIVSTAT_PURE_PYTHON", "") in ("", "0"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("hdivstat._kernels._structure", ["src/hdivstat/_kernels/_structure.pyx"],
                       include_dirs=[numpy.get_include()], extra_compile_args=["-O3"])],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
