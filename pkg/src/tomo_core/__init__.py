"""tomotx-core：Masked Sinogram Model 工具組。

模組一覽：
- phantom：假體影像與資料集
- ctgeom：平行束 Radon 轉換、FBP、劑量與遮罩
- diffcore：張量與反向自動微分
- model：Masked Sinogram Model 與下游輸出頭
- trainer / checkpoint：訓練流程與存檔
- metrics / methods：SSIM、PSNR 與掃描評估
"""

__version__ = '0.1.0'
