# -*- coding: utf-8 -*-
from setuptools import setup, find_packages

# Get the long description from the README file
with open('README.md', 'r') as f:
    long_description = f.read()

# Get requirements
with open('requirements.txt') as f:
    install_requires = f.read().strip().split('\n')

setup(
    name='reciter_id',
    version='0.1.0',
    description='Speaker identification from raw audio with wav2vec2/HuBERT-style pretraining.',
    long_description=long_description,
    long_description_content_type='text/markdown',
    packages=find_packages(exclude=['tests']),
    include_package_data=True,
    package_data={'': ['*.yml', '*.json', 'examples/*.cfg']},
    install_requires=install_requires,
    extras_require={'test': ['pytest', 'scikit-learn']},
    entry_points={
        'console_scripts': ['reciter-id=reciter_id.cmd_line:cmd_line_shortcut'],
    }
)
