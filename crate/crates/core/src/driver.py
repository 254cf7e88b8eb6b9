import ast
import contextlib
import io
import json
import sys


def canon(value):
    if isinstance(value, dict):
        items = sorted((canon(k), canon(v)) for k, v in value.items())
        return "{" + ", ".join(k + ": " + v for k, v in items) + "}"
    if isinstance(value, list):
        return "[" + ", ".join(canon(v) for v in value) + "]"
    if isinstance(value, tuple):
        inner = ", ".join(canon(v) for v in value)
        return "(" + inner + ("," if len(value) == 1 else "") + ")"
    if isinstance(value, (set, frozenset)):
        if not value:
            return "set()"
        return "{" + ", ".join(sorted(canon(v) for v in value)) + "}"
    return repr(value)


def main():
    tests_path, index, out_path = sys.argv[1], int(sys.argv[2]), sys.argv[3]
    with open(tests_path) as fh:
        spec = json.load(fh)
    test = spec["tests"][index]

    def emit(status, detail=""):
        detail = " ".join(str(detail).split())[:400]
        with open(out_path, "w") as fh:
            fh.write(test["id"] + "\t" + status + "\t" + detail + "\n")

    memory_mb = spec.get("memory_mb")
    if memory_mb:
        import resource

        limit = int(memory_mb) * 1024 * 1024
        resource.setrlimit(resource.RLIMIT_AS, (limit, limit))

    import socket

    def _no_network(*args, **kwargs):
        raise OSError("network access is disabled")

    socket.socket = _no_network
    socket.create_connection = _no_network

    with open("solution.py") as fh:
        source = fh.read()

    namespace = {"__name__": "__solution__"}
    captured = io.StringIO()
    try:
        with contextlib.redirect_stdout(captured):
            exec(compile(source, "solution.py", "exec"), namespace)
            if test["comparison"] == "stdout":
                exec(compile(test["invocation"], "<test>", "exec"), namespace)
                actual = None
            else:
                actual = eval(compile(test["invocation"], "<test>", "eval"), namespace)
    except BaseException as exc:
        emit("error", type(exc).__name__ + ": " + str(exc))
        return

    if test["comparison"] == "stdout":
        got, want = captured.getvalue().strip(), test["expected"].strip()
    else:
        try:
            expected = ast.literal_eval(test["expected"])
        except Exception as exc:
            emit("error", "malformed expected literal: " + str(exc))
            return
        got, want = canon(actual), canon(expected)

    if got == want:
        emit("pass")
    else:
        emit("fail", "expected " + want + ", got " + got)


main()
