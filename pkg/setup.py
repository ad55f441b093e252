from pathlib import Path
from setuptools import setup


def readme():
    this_directory = Path(__file__).parent.resolve()
    with open(this_directory / 'README.md', encoding='utf-8') as f:
        return f.read()


setup(
    name='mvlatent',
    version='0.1.0',
    description='Multi-view variational latent variable models (VCCA and friends) in numpy',
    long_description=readme(),
    long_description_content_type='text/markdown',
    license='MIT',
    packages=['mvlatent'],
    python_requires='>=3.8',
    entry_points={
        'console_scripts': [
            'mvlatent = mvlatent.main:main',
        ],
    },
    install_requires=[
        'coloredlogs',
        'numpy>=1.22',
        'packaging',
        'pathvalidate',
        'pygments',
        'scipy>=1.8',
        'shtab',
    ],
    extras_require={
        'test': ['pytest'],
    },
    classifiers=[
        "License :: OSI Approved :: MIT License",
        'Programming Language :: Python :: 3 :: Only',
        "Operating System :: OS Independent",
        'Development Status :: 3 - Alpha',
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    zip_safe=False,
)
