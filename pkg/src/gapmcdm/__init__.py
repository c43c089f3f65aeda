"""Semiparametric partial-mastery cognitive diagnosis models."""
