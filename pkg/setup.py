from setuptools import setup, find_packages
import sys

import edgeslam.version

if sys.version_info < (3, 7):
    sys.exit('Sorry, Python < 3.7 is not supported')

with open("requirements.txt", 'r') as file_h:
    requirements = [line.strip() for line in file_h.readlines() if line.strip()]

long_description = """

Edgeslam is a monocular visual SLAM library and batch tool that tracks edge points
through image sequences, estimates keyframe poses and a sparse edge-point map,
and evaluates trajectories against TUM-format ground truth.

"""

setup(
    name='edgeslam',
    version=edgeslam.version.__version__,
    packages=find_packages(exclude=["tests"]),
    provides=['edgeslam'],
    requires=['python (>=3.7)'],
    install_requires=requirements,
    long_description=long_description,
    license='GPL',
    description='Edge-point monocular SLAM with track-loss recovery and loop closure.',
    package_dir={'edgeslam': "edgeslam"},
    entry_points={
        'console_scripts': ['edgeslam=edgeslam.edgeslam_main:main']
    }
)
