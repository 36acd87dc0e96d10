"""Standalone decoder executable: ``adnet-zxing IMAGE``.

Prints the payload of the first QR symbol found and exits 0; exits 1 with no
output when nothing decodes, 2 on unreadable input.
"""

import sys


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: adnet-zxing IMAGE", file=sys.stderr)
        return 2
    import numpy as np
    import zxingcpp
    from PIL import Image

    try:
        img = np.asarray(Image.open(argv[0]).convert("L"))
    except OSError as exc:
        print(f"cannot read {argv[0]}: {exc}", file=sys.stderr)
        return 2
    for code in zxingcpp.read_barcodes(img, formats=zxingcpp.BarcodeFormat.QRCode):
        if code.valid and code.text:
            print(code.text)
            return 0
    return 1


if __name__ == "__main__":
    sys.exit(main())
