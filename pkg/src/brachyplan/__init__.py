"""Planning workstation for interstitial gynecologic brachytherapy.

Modules:
    volume        voxel grids, SVOL file format, slice extraction
    mesh          STL I/O and parametric device models
    registration  landmark fit, ICP refinement, rigid transforms
    segmentation  seeded region growing, margin expansion, surface clouds
    planning      needle trajectories, feasibility, dwell positions
    dosimetry     dose accumulation, DVH metrics, constraint verdicts
    igtlink       framed TCP message protocol for intraoperative exchange
    archive       content-addressed, versioned artifact store
    workflow      treatment stages and legal transitions
    service       HTTP API tying the workflow together
    cli           batch command-line front end
"""

__version__ = "0.1.0"
