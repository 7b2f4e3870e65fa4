"""
DA-SPL 命令行入口 - 青光眼眼底报告生成系统

加载 .env 中的环境变量后，把参数交给 daspl.cli。
支持的子命令：gen-data / train / generate / evaluate / ablate / gradcheck
"""

import sys

from dotenv import load_dotenv

from daspl.cli import main


# ==================== 启动应用 ====================
if __name__ == "__main__":
    # 先加载 .env，再读取 DASPL_* 配置
    load_dotenv()
    sys.exit(main())
