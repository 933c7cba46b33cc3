import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "beamtomo._kernels",
                ["src/beamtomo/_kernels.pyx"],
                include_dirs=[np.get_include()],
            )
        ],
        language_level=3,
    )
except ImportError:
    # pure-python kernels are used when the extension is unavailable
    ext_modules = []

setup(ext_modules=ext_modules)
