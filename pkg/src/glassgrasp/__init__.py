"""Transparent-object grasping on synthetic tabletop scenes."""
