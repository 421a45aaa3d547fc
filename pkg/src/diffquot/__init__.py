"""Differential quotients of polynomial type: x-side ODEs, their w-side transport systems and reconstruction tools."""
