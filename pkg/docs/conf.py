# Configuration file for the Sphinx documentation builder.
#
# This file only contains a selection of the most common options. For a full
# list see the documentation:
# http://www.sphinx-doc.org/en/master/config

# -- Path setup --------------------------------------------------------------

import os
import sys
sys.path.insert(0, os.path.abspath('..'))

import pylons_sphinx_themes  # noqa: E402

# -- Project information -----------------------------------------------------

project = 'propofol_cem'
copyright = '2026, the propofol_cem developers'
author = 'the propofol_cem developers'

# The short X.Y version
version = '0.1'
# The full version, including alpha/beta/rc tags
release = '0.1.0'


# -- General configuration ---------------------------------------------------

extensions = ['sphinx.ext.autodoc']

templates_path = ['_templates']

master_doc = 'index'

exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']

autodoc_member_order = 'bysource'


# -- Options for HTML output -------------------------------------------------

# Add and use Pyramid theme
html_theme = 'pyramid'
html_theme_path = pylons_sphinx_themes.get_html_themes_path()

html_static_path = []
