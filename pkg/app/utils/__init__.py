"""
Numeric, random-stream and output formatting helpers.
"""
