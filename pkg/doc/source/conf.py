# Configuration file for the Sphinx documentation builder.
#
# For the full list of built-in configuration values, see the documentation:
# https://www.sphinx-doc.org/en/master/usage/configuration.html

import importlib.metadata

project = "casslide"
copyright = "2026, casslide developers"
author = "casslide developers"
release = importlib.metadata.version("casslide").split("+")[0]

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.mathjax",
    "sphinx.ext.autosummary",
    "numpydoc",
    "sphinx.ext.viewcode",
    "sphinx_copybutton",
]

exclude_patterns = []

root_doc = "index"

copybutton_prompt_text = r">>> |\.\.\. |\$ "
copybutton_prompt_is_regexp = True

html_theme = "pydata_sphinx_theme"

autosummary_generate = True
numpydoc_show_class_members = False

html_theme_options = {
    "logo": {"text": "casslide"},
    "navbar_center": ["navbar-nav"],
    "navbar_end": ["theme-switcher"],
    "footer_start": ["copyright"],
    "footer_center": ["sphinx-version"],
}
