"""Market data services: quotes, Black-Scholes analytics and volatility surfaces."""
