from dfmoe.cli import main

main()
