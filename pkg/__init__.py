# ComfyUI-Buding-StreamASR
# 核心总入口：把插件目录加入 sys.path（节点依赖 buding_asr 包），再扫描 nodes/ 汇总所有节点

import os
import re
import sys
import importlib.util

PLUGIN_NAME = "ComfyUI-Buding-StreamASR"
PLUGIN_DIR = os.path.dirname(os.path.abspath(__file__))
if PLUGIN_DIR not in sys.path:
    sys.path.insert(0, PLUGIN_DIR)

print("""************************************************************

🎙️ComfyUI-Buding-StreamASR 插件加载成功🎙️
提示驱动的流式语音识别：合成语料 → 三阶段训练 → 分块融合解码

************************************************************""")

NODE_CLASS_MAPPINGS = {}
NODE_DISPLAY_NAME_MAPPINGS = {}


def _parse_mapping(content, name):
    """导入失败时从源码里直接抠出映射字典（只取字符串键值）"""
    match = re.search(name + r'\s*=\s*\{(.*?)\}', content, re.DOTALL)
    mapping = {}
    if not match:
        return mapping
    for line in match.group(1).split('\n'):
        line = line.strip().strip(',')
        if ':' not in line or line.startswith('#'):
            continue
        key, value = line.split(':', 1)
        key = key.strip().strip('"\'')
        value = value.strip().strip(',').strip('"\'')
        if key and value:
            mapping[key] = value
    return mapping


def load_nodes_from_module(module_name, module_path):
    try:
        spec = importlib.util.spec_from_file_location(module_name, module_path)
        module = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(module)
        NODE_CLASS_MAPPINGS.update(getattr(module, 'NODE_CLASS_MAPPINGS', {}))
        NODE_DISPLAY_NAME_MAPPINGS.update(getattr(module, 'NODE_DISPLAY_NAME_MAPPINGS', {}))
    except Exception as e:
        print(f"[{PLUGIN_NAME}] 跳过模块 {module_name}: {e}")
        # 缺依赖时仍登记显示名，方便在界面上看到是哪个节点没加载
        try:
            with open(module_path, 'r', encoding='utf-8') as f:
                content = f.read()
            class_mappings = _parse_mapping(content, 'NODE_CLASS_MAPPINGS')
            display_mappings = _parse_mapping(content, 'NODE_DISPLAY_NAME_MAPPINGS')
            if class_mappings and set(class_mappings) == set(display_mappings):
                NODE_DISPLAY_NAME_MAPPINGS.update(display_mappings)
                print(f"[{PLUGIN_NAME}] 备用解析识别到 {module_name}: {len(class_mappings)} 个节点（未注册）")
        except Exception as parse_e:
            print(f"[{PLUGIN_NAME}] 备用解析失败 {module_name}: {parse_e}")


nodes_dir = os.path.join(PLUGIN_DIR, 'nodes')
for file in sorted(os.listdir(nodes_dir)):
    if file.endswith('.py') and file != '__init__.py':
        load_nodes_from_module(file[:-3], os.path.join(nodes_dir, file))

__all__ = ['NODE_CLASS_MAPPINGS', 'NODE_DISPLAY_NAME_MAPPINGS']
