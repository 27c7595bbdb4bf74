import logging
import os

import config
from app.services.runs_service import write_manifest
from app.services.synthgen_service import generate_dataset, save_preview

logger = logging.getLogger("Dataset")

ARCHIVE_NAME = "dataset.ciea"
PREVIEW_NAME = "preview.png"


# ============================================================
#  gen-data
# ============================================================
def gen_data(args):
    """Gera o dataset, a prévia PNG do primeiro objeto e o manifest da rodada."""
    out_dir = args.out or os.path.join(config.RUNS_DIR, "data")
    archive_path = os.path.join(out_dir, ARCHIVE_NAME)
    archive = generate_dataset(
        num_classes=args.classes,
        objects_per_class=args.objects,
        n_views=args.views,
        size=args.size,
        seed=args.seed,
        val_fraction=args.val_fraction,
        path=archive_path,
    )
    preview_path = save_preview(archive, os.path.join(out_dir, PREVIEW_NAME))
    write_manifest(
        out_dir,
        "gen-data",
        dict(archive.manifest),
        outputs={"archive": archive_path, "preview": preview_path, "checksum": archive.checksum()},
    )
    print(archive.checksum())
    return archive


def register(subparsers):
    parser = subparsers.add_parser("gen-data", help="gera o dataset procedural de vistas rotacionadas")
    parser.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    parser.add_argument("--classes", type=int, default=8)
    parser.add_argument("--objects", type=int, default=20, help="objetos por classe")
    parser.add_argument("--views", type=int, default=8, help="vistas por objeto")
    parser.add_argument("--size", type=int, default=32, help="lado da imagem em pixels")
    parser.add_argument("--val-fraction", type=float, default=0.25)
    parser.add_argument("--out", help="diretório de saída (padrão: RUNS_DIR/data)")
    parser.set_defaults(handler=gen_data)
