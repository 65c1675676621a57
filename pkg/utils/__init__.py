# Utils package








