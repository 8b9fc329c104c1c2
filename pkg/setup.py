from pathlib import Path

from setuptools import find_packages, setup

requirements = [
    line.strip()
    for line in Path(__file__).with_name('requirements.txt').read_text().splitlines()
    if line.strip() and not line.startswith('#')
]

setup(
    name='multimatch',
    version='0.1.0',
    description='Multilevel cardinality matching for clustered observational studies',
    packages=find_packages(exclude=['matching.tests', 'matching.tests.*']),
    package_data={'matching': ['templates/matching/*.txt']},
    include_package_data=True,
    python_requires='>=3.10',
    install_requires=requirements,
    entry_points={
        'console_scripts': ['multimatch=multimatch.__main__:main'],
    },
)
