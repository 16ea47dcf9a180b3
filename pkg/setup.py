import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("LONGSUM_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        print("Cython/numpy unavailable at build time; installing the pure-Python kernel only")
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "longsum.kernels._banded_ext",
                    ["src/longsum/kernels/_banded_ext.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
