from setuptools import setup, find_packages

setup(name='pysegrt',
      version='0.1',
      description='A tiny real-time semantic segmentation toolkit built on numpy, with hand-written backprop',
      author='Andy Jones',
      author_email='andyjones.ed@gmail.com',
      url='https://github.com/andyljones/pysegrt',
      packages=find_packages(),
      python_requires='>=3.8',
      install_requires=[
          'numpy>=1.18', 'aljpy==0.4', 'scipy>=1.6', 'matplotlib>=3', 'tqdm>=4', 'pandas>=1', 'pillow>=7',
          'threadpoolctl>=2'],
      extras_require={'test': ['pytest>=6']},
      entry_points={'console_scripts': ['segrt=pysegrt.cli:main']})
