import numpy as np
import pytest
from hypothesis import given
from hypothesis.strategies import binary

from metaevo.chemistry import (
    COMMAND_LINE,
    SENTINEL,
    STACK_FLOOR,
    STACK_TOP,
    MicroOp,
    Op,
    Reg,
    Syscall,
    encode,
)
from metaevo.vm import (
    FaultKind,
    Host,
    LoadError,
    Status,
    load,
    run,
    step,
    trace,
)

from .strategies import u32


def movi(value: int) -> MicroOp:
    return MicroOp(Op.MOVI, value & 0xFFFFFFFF)


def mov(dst: Reg, src: Reg) -> MicroOp:
    return MicroOp(Op.MOV, (dst << 4) | src)


def op(code: Op, operand: int = 0) -> MicroOp:
    return MicroOp(code, operand)


def program(*ops: MicroOp) -> bytes:
    return encode(ops)


@pytest.mark.vm
def test_load_layout() -> None:
    state = load(program(op(Op.RET)), b"\x01\x02", "a.rpw")
    assert state.ip == 0
    assert state.sp == STACK_TOP
    assert state.read32(STACK_TOP) == SENTINEL
    assert state.read32(0x5000) & 0xFFFF == 0x0201
    assert bytes(state.memory[COMMAND_LINE : COMMAND_LINE + 6]) == b"a.rpw\0"
    assert state.instructions_executed == 0


@pytest.mark.vm
def test_load_oversize() -> None:
    with pytest.raises(LoadError):
        load(bytes(0x5001))
    with pytest.raises(LoadError):
        load(b"", bytes(0x1001))


@pytest.mark.vm
def test_empty_program_exits() -> None:
    state = load(b"")
    assert step(state) is Status.EXITED


@pytest.mark.vm
def test_ret_onto_sentinel_exits() -> None:
    state = load(program(op(Op.RET)))
    assert run(state, 10) is Status.EXITED
    assert state.instructions_executed == 1


@pytest.mark.vm
def test_nops_are_free() -> None:
    state = load(bytes([Op.NOP]) * 40 + program(op(Op.RET)))
    assert run(state, 1) is Status.EXITED
    assert state.instructions_executed == 1


@pytest.mark.vm
def test_budget_must_be_positive() -> None:
    with pytest.raises(ValueError):
        run(load(b""), 0)


@pytest.mark.vm
@given(u32, u32)
def test_add_immediate_wraps(a: int, b: int) -> None:
    state = load(program(movi(a), MicroOp(Op.ADDI, b), op(Op.RET)))
    assert run(state, 10) is Status.EXITED
    assert state.reg(Reg.BC1) == (a + b) % 2**32
    assert state.zf == int((a + b) % 2**32 == 0)


@pytest.mark.vm
@given(u32, u32)
def test_mul_full_product(a: int, b: int) -> None:
    state = load(program(movi(a), mov(Reg.RegA, Reg.BC1), movi(b), op(Op.MUL), op(Op.RET)))
    run(state, 10)
    assert state.reg(Reg.RegA) == (a * b) & 0xFFFFFFFF
    assert state.reg(Reg.RegD) == (a * b) >> 32


@pytest.mark.vm
@given(u32, u32)
def test_div(a: int, b: int) -> None:
    state = load(
        program(
            movi(a), mov(Reg.RegA, Reg.BC1), movi(0), mov(Reg.RegD, Reg.BC1),
            movi(b), op(Op.DIV), op(Op.RET),
        )
    )
    status = run(state, 10)
    if b == 0:
        assert status is Status.FAULTED
        assert state.fault is not None and state.fault.kind is FaultKind.DivideByZero
    else:
        assert status is Status.EXITED
        assert state.reg(Reg.RegA) == a // b
        assert state.reg(Reg.RegD) == a % b


@pytest.mark.vm
def test_div_overflow_faults() -> None:
    state = load(program(movi(5), mov(Reg.RegD, Reg.BC1), movi(5), op(Op.DIV)))
    assert run(state, 10) is Status.FAULTED
    assert state.fault is not None and state.fault.kind is FaultKind.DivideByZero


@pytest.mark.vm
def test_shifts_and_logic() -> None:
    state = load(program(movi(3), mov(Reg.BC2, Reg.BC1), movi(1), op(Op.SHL), op(Op.RET)))
    run(state, 10)
    assert state.reg(Reg.BC1) == 8
    state = load(program(movi(0xF0), mov(Reg.BC2, Reg.BC1), movi(0xF0), op(Op.XOR), op(Op.RET)))
    run(state, 10)
    assert state.reg(Reg.BC1) == 0
    assert state.zf == 1


@pytest.mark.vm
def test_push_pop() -> None:
    state = load(program(movi(7), op(Op.PUSH), movi(0), op(Op.POP), op(Op.RET)))
    assert run(state, 10) is Status.EXITED
    assert state.reg(Reg.BC1) == 7
    assert state.sp == STACK_TOP + 4


@pytest.mark.vm
def test_stack_underflow() -> None:
    state = load(program(op(Op.POP), op(Op.POP)))
    assert run(state, 10) is Status.FAULTED
    assert state.fault is not None
    assert state.fault.kind is FaultKind.StackUnderflow
    assert state.fault.ip == 1


@pytest.mark.vm
def test_stack_overflow() -> None:
    # push; jmp 0 forever
    state = load(program(movi(0), mov(Reg.BA2, Reg.BC1), op(Op.PUSH), op(Op.JMP)))
    state.set_reg(Reg.BA2, 7)
    state.ctl[0] = 7
    assert run(state, 100_000) is Status.FAULTED
    assert state.fault is not None and state.fault.kind is FaultKind.StackOverflow
    assert state.sp >= STACK_FLOOR


@pytest.mark.vm
def test_invalid_opcode() -> None:
    state = load(program(movi(1)) + b"\x00")
    assert run(state, 10) is Status.FAULTED
    assert state.fault is not None
    assert state.fault.kind is FaultKind.InvalidOpcode
    assert state.fault.ip == 5


@pytest.mark.vm
def test_store_out_of_bounds() -> None:
    state = load(program(movi(0xFFFE), mov(Reg.BA1, Reg.BC1), op(Op.STORED)))
    assert run(state, 10) is Status.FAULTED
    assert state.fault is not None and state.fault.kind is FaultKind.MemoryOutOfBounds


@pytest.mark.vm
def test_store_and_load() -> None:
    state = load(
        program(
            movi(0x5010), mov(Reg.BA1, Reg.BC1), movi(0xDEADBEEF), op(Op.STORED),
            movi(0x5010), op(Op.LOADD), op(Op.RET),
        )
    )
    run(state, 10)
    assert state.reg(Reg.BC1) == 0xDEADBEEF
    assert state.read32(0x5010) == 0xDEADBEEF


@pytest.mark.vm
def test_budget_stops_endless_loop() -> None:
    state = load(program(movi(0), mov(Reg.BA2, Reg.BC1), op(Op.JMP)))
    assert run(state, 100) is Status.BUDGET
    assert state.instructions_executed == 100
    assert run(state, 50) is Status.BUDGET
    assert state.instructions_executed == 150


@pytest.mark.vm
def test_getip_and_conditional_jumps() -> None:
    state = load(program(op(Op.GETIP), op(Op.RET)))
    run(state, 10)
    assert state.reg(Reg.BC1) == 1
    # ZF set by subi; jz skips the invalid byte
    code = program(movi(1), MicroOp(Op.SUBI, 1), op(Op.JZ, 1)) + b"\x00" + program(op(Op.RET))
    assert run(load(code), 10) is Status.EXITED


@pytest.mark.vm
def test_bare_host_syscalls() -> None:
    state = load(program(op(Op.SYSCALL, Syscall.GetTickCount), op(Op.RET)))
    state.set_reg(Reg.BC1, 9)
    assert run(state, 10, Host()) is Status.EXITED
    assert state.reg(Reg.BC1) == 0
    assert state.syscalls == {Syscall.GetTickCount: 1}


@pytest.mark.vm
def test_syscall_pops_arguments() -> None:
    state = load(
        program(movi(0), op(Op.PUSH), movi(0), op(Op.PUSH), op(Op.SYSCALL, Syscall.CopyFile), op(Op.RET))
    )
    assert run(state, 20) is Status.EXITED
    assert state.reg(Reg.BC1) == 0


@pytest.mark.vm
def test_bad_syscall_args() -> None:
    state = load(program(op(Op.SYSCALL, Syscall.CopyFile)))
    assert run(state, 10) is Status.FAULTED
    assert state.fault is not None and state.fault.kind is FaultKind.BadSyscallArgs


@pytest.mark.vm
def test_sleep_yields() -> None:
    state = load(program(movi(5), op(Op.PUSH), op(Op.SYSCALL, Syscall.Sleep), op(Op.RET)))
    assert run(state, 10) is Status.YIELDED
    assert state.wake_at == 5
    assert run(state, 10) is Status.EXITED


@pytest.mark.vm
def test_getcommandline() -> None:
    state = load(program(op(Op.SYSCALL, Syscall.GetCommandLine), op(Op.RET)), b"", "x.rpw")
    run(state, 10)
    assert state.reg(Reg.BC1) == COMMAND_LINE


@pytest.mark.vm
def test_trace() -> None:
    state = load(program(movi(3), op(Op.RET)))
    lines = list(trace(state, 10))
    assert lines[0].startswith("0000 MOVI 0x3")
    assert "BC1=00000000" in lines[0]
    assert lines[0][29:34] == " RegA"
    names = [field.split("=")[0] for field in lines[1].split()[-8:]]
    assert names == ["RegA", "RegB", "RegD", "BC1", "BC2", "BA1", "BA2", "ZF"]
    assert lines[1].startswith("0005 RET") and "BC1=00000003" in lines[1]
    assert lines[-1] == "-- EXITED"
    assert len(lines) == 3


@pytest.mark.vm
@given(binary(min_size=1, max_size=200))
def test_runs_are_deterministic(image: bytes) -> None:
    a, b = load(image), load(image)
    sa, sb = run(a, 500), run(b, 500)
    assert sa is sb
    assert np.array_equal(a.memory, b.memory)
    assert np.array_equal(a.regs, b.regs)
    assert a.ip == b.ip
    assert a.instructions_executed <= 500


@pytest.mark.vm
def test_copy_is_independent() -> None:
    state = load(program(movi(3), op(Op.RET)))
    twin = state.copy()
    run(state, 10)
    assert twin.instructions_executed == 0
    assert twin.reg(Reg.BC1) == 0
