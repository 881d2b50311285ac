"""mgrid: a desk-scale federated mammogram database.

Each hospital site runs one node ("gridbox") that stores immutable image
files, replicates a shared file catalogue and metadata view to its peers,
answers federated clinical queries, exchanges encrypted datasets over a
DICOM-style association protocol, and runs analysis jobs next to the data.
"""

__version__ = "0.1.0"
