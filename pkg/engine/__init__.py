"""Local occupied volatility engine: occupation flows, simulation, pricing and calibration."""
