"""Knowledge-graph embedding with relation-semantics consistent filtering."""

__version__ = "0.1.0"
