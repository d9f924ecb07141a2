"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension (a pure numpy
backend is selected at import time), so any failure to cythonize or
compile downgrades to a pure-Python install instead of aborting.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "vlalign.kernels._fast",
                ["src/vlalign/kernels/_fast.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    print(f"vlalign: building without compiled kernels ({exc})")

setup(ext_modules=ext_modules)
