"""Wake-word robustness workbench: STRF cortical features, highway classifiers, universal attacks."""

__version__ = "0.1.0"
