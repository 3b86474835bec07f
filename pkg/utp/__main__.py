from utp.cli.main import main

main()
