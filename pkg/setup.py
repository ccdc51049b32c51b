"""Build the optional compiled kernels; without Cython the package installs pure Python."""

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext = Extension(
        "sweepopt._ckernels",
        ["src/sweepopt/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    ext_modules = cythonize([ext], compiler_directives={"language_level": "3"})

setup(ext_modules=ext_modules)
