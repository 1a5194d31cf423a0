"""Workspace end-to-end tests for the surfel reconstruction pipeline"""
