"""Deobfuscation stages: instruction substitution, bogus control flow and
control-flow flattening."""
