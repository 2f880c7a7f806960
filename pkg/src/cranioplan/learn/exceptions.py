class LearnError(ValueError):
    """Raised for invalid regression inputs, specs, or datasets."""
