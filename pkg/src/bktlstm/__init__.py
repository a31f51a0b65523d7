"""Knowledge tracing with BKT mastery, ability profiles and problem difficulty
fed to a recurrent predictor."""

__version__ = "0.1.0"
