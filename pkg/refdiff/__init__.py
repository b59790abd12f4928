"""
refdiff

反射拡散過程ツール - 原点または区間 [0,a] で反射される状態依存拡散の定常分布・スケール関数・
レギュレータ期待値を閉形式で計算し、経路シミュレーションで検証します
"""

__version__ = "0.1.0"
