"""Volterrisk - BSVIE-with-jumps solvers and dynamic risk measures."""
