def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_compalign_criteria", None)
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
