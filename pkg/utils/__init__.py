# Utils package for nodal-glue
