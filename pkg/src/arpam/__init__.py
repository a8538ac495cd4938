"""arpam: desk-scale transcranial photoacoustic microscopy simulation.

Pipeline: voxel head phantom -> pulsed-laser light transport (absorbed
energy density) -> initial acoustic pressure -> k-space wave propagation
through skull and brain -> concave focused-array sensing -> time/frequency
feature extraction -> parameter studies with self-checking trend reports.
"""

__version__ = "0.1.0"
