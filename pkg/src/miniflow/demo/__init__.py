"""Example nodes for the publisher/subscriber dataflow in the docs."""
