import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; the numpy rank kernel is used
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("clipreid.evaluation._rank_cy", ["src/clipreid/evaluation/_rank_cy.pyx"],
                   include_dirs=[np.get_include()], optional=True)],
        language_level=3,
    )

setup(ext_modules=ext_modules)
