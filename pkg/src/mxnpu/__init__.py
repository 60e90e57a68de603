"""Simulator for an MXINT8 LLM NPU."""
