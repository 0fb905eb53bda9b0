"""
Geometry, simulation and estimation services.
"""
