"""
FastAPI server for natlab runs.
"""
