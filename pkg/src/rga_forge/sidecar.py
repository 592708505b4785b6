"""Gradient-oracle sidecar exposing the toy encoder over stdin/stdout.

Speaks newline-delimited JSON: each request line gets exactly one response
line, in order. Payloads are base64 little-endian float32. Run with
`python -m rga_forge.sidecar --seed 0`.
"""

import argparse
import json
import sys

from .victim import ToyVictim, _b64, _unb64


def handle_request(victim, request):
    op = request.get("op")
    if op == "encode":
        image = _unb64(request["data"], tuple(request["shape"]))
        out = victim.encode(image)
        return {"ok": True, "shape": [int(out.shape[0])], "data": _b64(out)}
    if op == "encode_vjp":
        image = _unb64(request["data"], tuple(request["shape"]))
        cot = _unb64(request["cotangent"], tuple(request["cotangent_shape"]))
        out = victim.encode_vjp(image, cot)
        return {"ok": True, "shape": list(out.shape), "data": _b64(out)}
    return {"ok": False, "error": f"unsupported op {op!r}"}


def serve(victim, stdin=None, stdout=None):
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        req_id = -1
        try:
            request = json.loads(line)
            req_id = request.get("id", -1)
            response = handle_request(victim, request)
        except Exception as exc:  # report, never crash the loop
            response = {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
        response["id"] = req_id
        stdout.write(json.dumps(response) + "\n")
        stdout.flush()


def main(argv=None):
    parser = argparse.ArgumentParser(description="toy encoder gradient oracle")
    parser.add_argument("--seed", type=int, default=0, help="toy victim weight seed")
    args = parser.parse_args(argv)
    serve(ToyVictim(seed=args.seed))
    return 0


if __name__ == "__main__":
    sys.exit(main())
