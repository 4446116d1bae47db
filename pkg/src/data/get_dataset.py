"""
Downloads the gzipped MNIST image IDX files and unpacks them to a local folder.
Usage: src/data/get_dataset.py [--url=<url>] [--out_dir=<out_dir>]
Options:
--url=<url>              Base URL of the MNIST mirror (must end with a slash)
--out_dir=<out_dir>      Folder where the IDX files are written, optional
"""

from docopt import docopt
import requests
import gzip
import os
import time

MNIST_URL = "https://ossci-datasets.s3.amazonaws.com/mnist/"
MNIST_ARCHIVES = ["train-images-idx3-ubyte.gz", "t10k-images-idx3-ubyte.gz"]


def main(url=MNIST_URL, out_dir=None):
    """
    downloads the MNIST image files to the data/raw/mnist folder
    """
    if url is None:
        url = MNIST_URL
    if out_dir is None:
        out_dir = os.path.join('data', 'raw', 'mnist')
    try:
        assert len(url.split(' ')) == 1
        os.makedirs(out_dir, exist_ok=True)
        for archive in MNIST_ARCHIVES:
            idx_path = os.path.join(out_dir, archive[:-len('.gz')])
            if os.path.exists(idx_path):
                print("Data already exist:", idx_path)
                continue
            print("Pulling", archive, "from the web...")
            start = time.time()
            r = requests.get(url + archive, allow_redirects=True, timeout=300)
            r.raise_for_status()
            print("Downloading completed using", time.time() - start, 'seconds.')
            print("Unzipping the file")
            with open(idx_path, 'wb') as f:
                f.write(gzip.decompress(r.content))
        return 0
    except Exception as req:
        print("An error occurred. Please try again and make sure you are using the correct command")
        print(req)
        return -1


if __name__ == "__main__":
    opt = docopt(__doc__)
    main(opt["--url"], opt["--out_dir"])
