from factormodel.cli import main

raise SystemExit(main())
