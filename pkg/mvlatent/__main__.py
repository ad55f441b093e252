#!/usr/bin/env python3
import sys

from mvlatent.main import EXIT_INTERRUPTED, main
from mvlatent.utils import get_logger

if __name__ == '__main__':
    try:
        main()
    except KeyboardInterrupt:
        get_logger(__name__).info('Interrupted')
        sys.exit(EXIT_INTERRUPTED)
    except Exception as e:
        get_logger(__name__).fatal(f'Unhandled {type(e).__name__}: {e}')
        raise
