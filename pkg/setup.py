#!/usr/bin/env python
import codecs
import os.path
import re
from setuptools import setup, find_packages

extra = {}


def read_requirements_file(file):
    fname = os.path.join(os.path.abspath(os.path.dirname(__file__)), file)
    with open(fname, 'r') as r:
        return [line for line in r.readlines()
                if line.strip() and not line.startswith('#')]


install_requires = read_requirements_file('requirements-base.txt')

extra['entry_points'] = {
    'console_scripts': [
        'retina_align = retina_align.main:main',
    ]}
extra['install_requires'] = install_requires
extra['package_data'] = {'retina_align': ['data/*.json']}


this_directory = os.path.abspath(os.path.dirname(__file__))


init_fname = os.path.join(this_directory, 'retina_align', '__init__.py')
with codecs.open(init_fname, 'r', 'latin1') as fp:
    try:
        version = re.findall(r"^__version__ = '([^']+)'\r?$",
                             fp.read(), re.M)[0]
    except IndexError:
        raise RuntimeError('Unable to determine version.')


readme_fname = os.path.join(this_directory, 'README.rst')
with codecs.open(readme_fname, 'r', 'utf-8') as f:
    long_description = f.read()


setup(
    name='retina_align',
    version=version,
    description=('Category-aware vision-language alignment, prompt-ensemble '
                 'zero-shot classification and few-shot adapters on '
                 'precomputed fundus image features'),
    long_description=long_description,
    license='BSD',
    packages=find_packages(exclude=['tests']),
    python_requires='>=3.7',
    classifiers=[
        'License :: OSI Approved :: BSD License',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.7',
        'Programming Language :: Python :: 3.8',
        'Topic :: Scientific/Engineering :: Medical Science Apps.',
    ],
    **extra
)
