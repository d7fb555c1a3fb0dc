from crash_recon.main import cli

cli(prog_name="crash-recon")
