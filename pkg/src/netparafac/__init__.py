"""CP/PARAFAC tensor analysis of broadband network measurements.

Modules cover the CP model and its online variants, synthetic traffic
and QoS generators, DDoS feature extraction and detection, and QoS
clustering over a topology tree.
"""
