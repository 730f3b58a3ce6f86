"""測試模組。"""
