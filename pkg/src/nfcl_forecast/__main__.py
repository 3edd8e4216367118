from nfcl_forecast.cli import main

main()
