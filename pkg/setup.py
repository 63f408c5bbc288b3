#!/usr/bin/env python

from setuptools import setup, find_packages

REQUIRE = [
    'absl-py>=1.0',
    'numpy>=1.22',
    'scipy>=1.8',
    'Pillow>=9.0',
    ]


PTYCHOSTREAM_STUBS = [
    ('ptychostream', 'RunPtychostream'),
    ]
PTYCHOSTREAM_ENTRY_POINTS = ['%s = ptychostream.stubs:%s' % s
                             for s in PTYCHOSTREAM_STUBS]


setup(
    name = 'ptychostream',
    version = '0.1',
    packages = find_packages(exclude=['tests']),

    entry_points = {
        'console_scripts': PTYCHOSTREAM_ENTRY_POINTS,
        },

    python_requires = '>=3.8',
    install_requires = REQUIRE,

    tests_require = REQUIRE + ['mox3>=1.0'],
    extras_require = {
        'test': ['mox3>=1.0'],
        },

    zip_safe=False,
    )
