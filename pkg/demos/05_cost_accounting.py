"""Round and byte meters against the analytic cost model.

Every send is metered twice: wire bytes as serialized, and cost-model
bytes where ring elements count their width and bit-ring elements count a
single bit. The malicious variants double every transmitted element.
"""

from falcon.cli import main

PROTOCOLS = ["mult", "matmul", "pc", "wa", "relu", "pow", "div", "bn"]

if __name__ == "__main__":
    for proto in PROTOCOLS:
        main(["bench", "--protocol", proto, "--n", "256"])
        print()
    print("same protocols under the malicious model (bytes double exactly):")
    main(["bench", "--protocol", "matmul", "--dims", "8,8,8", "--threat", "malicious"])
    print()
    main(["bench", "--protocol", "relu", "--n", "256", "--threat", "malicious", "--reference"])
