"""Mini instruction set: model, assembly text, CFGs and the interpreter."""

from .asm import AsmError, parse_instruction, parse_program, serialize_function, serialize_program
from .cfg import Cfg, Edge, build_cfg, emit_dot
from .interp import (
    CallDepthError, CompiledProgram, DivergenceError, ExecResult, ExecutionError, Machine,
    compile_program, interpret, trace_run,
)
from .model import (
    FLAGS, MASK, BasicBlock, Function, Imm, Instruction, IRError, Program, Reg, ins,
    to_signed, to_unsigned,
)

__all__ = [
    "AsmError", "BasicBlock", "CallDepthError", "Cfg", "CompiledProgram", "DivergenceError",
    "Edge", "ExecResult", "ExecutionError", "FLAGS", "Function", "IRError", "Imm",
    "Instruction", "MASK", "Machine", "Program", "Reg", "build_cfg", "compile_program",
    "emit_dot", "ins", "interpret", "parse_instruction", "parse_program",
    "serialize_function", "serialize_program", "to_signed", "to_unsigned", "trace_run",
]
