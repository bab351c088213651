"""Obfuscate, deobfuscate and score programs in an ARM-flavoured mini ISA."""

__version__ = "0.1.0"
