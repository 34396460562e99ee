from dclm.cli import main

main()
