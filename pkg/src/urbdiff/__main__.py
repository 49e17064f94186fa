from urbdiff.cli import main

main()
