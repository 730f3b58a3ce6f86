"""tomotx 命令列應用層，基於 tomo_core。"""
