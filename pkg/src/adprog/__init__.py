"""Alzheimer progression model: difference equations plus an RL allocation agent."""
