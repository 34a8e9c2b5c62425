# Sphinx configuration for the pysegrt docs.
import os
import sys
sys.path.insert(0, os.path.abspath('..'))

project = 'pysegrt'
copyright = '2026, Andy L. Jones'
author = 'Andy L. Jones'
release = '0.1'

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.linkcode',
    'sphinx.ext.intersphinx',
    'sphinx.ext.mathjax',
]

exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']

html_theme = 'alabaster'
html_theme_options = {
    'description': 'Real-time semantic segmentation in numpy',
    'fixed_sidebar': True,
    'github_button': True,
    'github_user': 'andyljones',
    'github_repo': 'pysegrt',
    'github_type': 'star',
    'github_count': False,
}
html_sidebars = {'**': ['about.html', 'navigation.html', 'relations.html']}

autoclass_content = 'both'
autodoc_member_order = 'bysource'

def linkcode_resolve(domain, info):
    if (domain != 'py') or not info['module']:
        return None
    filename = info['module'].replace('.', '/') + '.py'
    return f'https://github.com/andyljones/pysegrt/tree/master/{filename}'

intersphinx_mapping = {
    'numpy': ('https://numpy.org/doc/stable', None),
    'pandas': ('https://pandas.pydata.org/docs', None)}
