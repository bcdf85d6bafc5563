try:
    from setuptools import setup
except ImportError:
    from distutils.core import setup

setup(
    name="palasr",
    packages=['palasr'],
    install_requires=[
        'numpy', 'scipy', 'numba', 'pandas', 'cytoolz', 'tqdm', 'ujson',
        'joblib>=0.10', 'python-dotenv', 'attrs', 'threadpoolctl',
    ],
    entry_points={
        'console_scripts': ['palasr=palasr.cli:main'],
    },
)
