from pathlib import Path

from nsn.data_io import load_checkpoint, save_checkpoint, write_records_jsonl
from nsn.decorators import command_errors
from nsn.surgery import SurgeryPlan, surgical_replace

from ._base import ExperimentCommand, parse_int_list


class Command(ExperimentCommand):
    help = 'Replace dense layers of a checkpoint with SVD-initialized NSN layers.'
    default_config = False

    def add_arguments(self, parser):
        parser.add_argument('input', help='Checkpoint to transform.')
        parser.add_argument('output', help='Where to write the transformed checkpoint.')
        parser.add_argument('--layers', type=parse_int_list,
                            help='Comma-separated layer indices (default: the config surgery section).')
        parser.add_argument('--max-rank', type=int, dest='max_rank',
                            help='Target max rank for every replaced layer (default: min(d_in, d_out)).')

    @command_errors
    def handle(self, *args, **options):
        config = self.setup(options)
        output = Path(options['output'])
        out = self.output_dir(options, config, fallback=output.parent)

        layers = options['layers'] if options['layers'] is not None else config.surgery['layers']
        max_rank = options['max_rank'] if options['max_rank'] is not None else config.surgery.get('max_rank')
        plan = SurgeryPlan(frozenset(layers), max_rank)

        result = surgical_replace(load_checkpoint(options['input']), plan)
        output.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.checkpoint.model, result.checkpoint.uncertainty, result.checkpoint.meta, output)
        write_records_jsonl(result.report, out / 'surgery_report.jsonl')

        for entry in result.report:
            self.stdout.write(
                f'  layer {entry["index"]}: rank {entry["max_rank"]}, '
                f'relative error {entry["relative_truncation_error"]:.3e}'
            )
        self.success(f'Replaced {len(result.report)} layers; wrote {output}')
