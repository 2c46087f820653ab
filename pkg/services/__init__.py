"""Servicios del toolkit: esquemas, autómatas, decodificador, mundo simulado, dataset, razonamiento y evaluación."""
