"""
Result and configuration models.
"""
