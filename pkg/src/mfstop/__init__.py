"""Mean-field optimal stopping with uncontrolled McKean-Vlasov dynamics."""

__version__ = "0.1.0"
