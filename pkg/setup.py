from os import path
from setuptools import setup, find_packages

here = path.abspath(path.dirname(__file__))
README = open(path.join(here, 'README.rst')).read()
CHANGES = open(path.join(here, 'CHANGES.txt')).read()

requires = [
    'numpy>=1.20', 'scipy>=1.6', 'pandas>=1.2',
    'pyramid>=1.10', 'plaster_pastedeploy']

testing_extras = [
    'coverage']
docs_extras = [
    'Sphinx>=2.4,<3', 'pylons-sphinx-themes']

setup(
    name='propofol_cem',
    version='0.1.0',
    description='Closed-loop propofol dosing workbench',
    long_description=README + '\n\n' + CHANGES,
    long_description_content_type='text/x-rst',
    classifiers=[
        "Programming Language :: Python",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Medical Science Apps.",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Intended Audience :: Science/Research",
        "Development Status :: 3 - Alpha",
        "License :: Repoze Public License"],
    license="BSD-derived (http://www.repoze.org/LICENSE.txt)",
    keywords='propofol anesthesia closed-loop pharmacokinetics '
             'reinforcement-learning cross-entropy pid',
    packages=find_packages(exclude=['docs', 'tests']),
    zip_safe=False,
    python_requires='>=3.8',
    install_requires=requires,
    tests_require=requires,
    extras_require=dict(
        docs=docs_extras,
        testing=testing_extras),
    test_suite='tests',
    entry_points={
        'console_scripts': ['propofol-cem = propofol_cem.cli:main']})
