from graphformers.cli import main

main()
