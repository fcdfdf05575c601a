"""Service-time distribution prediction from urban context on a hexagonal grid."""
