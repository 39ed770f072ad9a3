"""Physics-assisted weather forecasting on a spherical latitude-longitude grid."""

__version__ = "0.1.0"
