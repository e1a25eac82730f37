"""
Moment Measure Solver Package
"""
