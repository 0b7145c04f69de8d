"""Knowledge-graph recommender for data discovery."""
