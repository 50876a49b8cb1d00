"""Build script: compiles the small-matrix SVD kernel when a toolchain is
available and degrades to the pure-Python backend otherwise."""

import sys

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    extensions = cythonize(
        [
            Extension(
                "latentalign._svdcore",
                sources=["src/latentalign/_svdcore.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except Exception as exc:  # pragma: no cover - toolchain-dependent
    print(f"latentalign: skipping compiled kernel ({exc}); "
          "the pure-Python backend will be used", file=sys.stderr)
    extensions = []

setup(ext_modules=extensions)
