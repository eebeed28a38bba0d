/**
 * Python wrapper that runs one agent script in a fresh interpreter.
 *
 * The wrapper, not the service, enforces the guards: network sockets are
 * disabled under every policy, and "imaging_only" additionally whitelists
 * importable module roots and disables process creation (so child
 * processes cannot be used to reach the network either). Agent code is
 * compiled under a stable filename so tracebacks point at its own lines.
 */

// Imaging / numeric / standard-library roots importable under
// "imaging_only". Network modules are absent; subprocess is importable
// because numpy's import chain needs the module object (via platform),
// but its spawn functions are disabled below.
const ALLOWED_ROOTS = [
  // imaging and numerics
  "PIL", "numpy", "cv2", "scipy",
  // stdlib used by image scripts and by the libraries above
  "os", "sys", "io", "re", "math", "cmath", "json", "random", "secrets",
  "pathlib", "collections", "itertools", "functools", "operator", "types",
  "typing", "dataclasses", "enum", "abc", "numbers", "fractions", "decimal",
  "statistics", "struct", "array", "heapq", "bisect", "copy", "copyreg",
  "pickle", "string", "textwrap", "unicodedata", "base64", "binascii",
  "colorsys", "hashlib", "hmac", "zlib", "gzip", "bz2", "lzma", "csv",
  "glob", "fnmatch", "tempfile", "shutil", "time", "datetime", "calendar",
  "warnings", "traceback", "linecache", "inspect", "ast", "dis", "opcode",
  "token", "tokenize", "keyword", "reprlib", "pprint", "difflib", "weakref",
  "gc", "atexit", "contextlib", "contextvars", "errno", "stat", "platform",
  "sysconfig", "site", "locale", "codecs", "encodings", "signal", "select",
  "selectors", "threading", "queue", "uuid", "importlib", "zipimport",
  "marshal", "builtins", "posixpath", "ntpath", "genericpath", "ctypes",
  "mmap", "resource", "logging", "fcntl", "subprocess", "argparse",
  "configparser", "gettext", "pkgutil", "zipfile", "fileinput",
];

export const RUNNER_SOURCE = `import builtins
import sys

ALLOWED_ROOTS = frozenset(${JSON.stringify(ALLOWED_ROOTS)})


def _disable_network():
    import socket

    def _blocked(*args, **kwargs):
        raise OSError("network access is disabled in the sandbox")

    class _BlockedSocket(socket.socket):
        # subclassable (ssl needs that at import time), never constructible
        def __init__(self, *args, **kwargs):
            raise OSError("network access is disabled in the sandbox")

    socket.socket = _BlockedSocket
    socket.create_connection = _blocked
    socket.socketpair = _blocked
    socket.getaddrinfo = _blocked
    socket.create_server = _blocked


def _disable_process_creation():
    import os
    import subprocess

    def _blocked(*args, **kwargs):
        raise OSError("process creation is disabled in the sandbox")

    subprocess.Popen = _blocked
    subprocess.run = _blocked
    subprocess.call = _blocked
    subprocess.check_call = _blocked
    subprocess.check_output = _blocked
    for attr in (
        "system", "popen", "fork", "forkpty", "posix_spawn", "posix_spawnp",
        "execv", "execve", "execvp", "execvpe", "execl", "execle", "execlp",
        "execlpe", "spawnl", "spawnle", "spawnlp", "spawnlpe", "spawnv",
        "spawnve", "spawnvp", "spawnvpe",
    ):
        if hasattr(os, attr):
            setattr(os, attr, _blocked)


def _install_import_guard():
    real_import = builtins.__import__

    def guarded(name, globals=None, locals=None, fromlist=(), level=0):
        root = name.split(".")[0]
        if level == 0 and root and not root.startswith("_") and root not in ALLOWED_ROOTS:
            raise ImportError("import of %r is not allowed by the sandbox policy" % root)
        return real_import(name, globals, locals, fromlist, level)

    builtins.__import__ = guarded


def main():
    script_path, policy = sys.argv[1], sys.argv[2]
    with open(script_path, encoding="utf-8") as handle:
        code = handle.read()
    _disable_network()
    if policy == "imaging_only":
        _disable_process_creation()
        _install_import_guard()
    namespace = {"__name__": "__main__", "__file__": "agent_code.py", "__builtins__": builtins}
    exec(compile(code, "agent_code.py", "exec"), namespace)


main()
`;
