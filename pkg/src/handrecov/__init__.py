"""Hand appearance recovery toolkit: structure sketching, appearance
wrapping with dual adversarial discrimination, and masked FID/KID metrics,
all runnable on the bundled procedural synthetic data."""

__version__ = "0.1.0"
